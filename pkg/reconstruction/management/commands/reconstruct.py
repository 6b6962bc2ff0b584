from reconstruction.experiments import run_reconstruct

from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Degrade an image, build the frozen kernel denoiser and run the configured PnP solver'

    def run(self, config, options):
        report, trajectory = run_reconstruct(config)
        self.stdout.write(
            f"{report.task} / {report.algorithm}: PSNR {report.input_psnr:.2f} dB -> {report.final_psnr:.2f} dB"
        )
        self.stdout.write(f"{report.iterations} iterations ({report.termination}) in {report.wall_time:.2f}s")
        rate = trajectory.geometric_rate(skip=2)
        if rate is not None:
            self.stdout.write(f"Fitted contraction rate: {rate:.6f}")
        if report.measured_factor is not None:
            bound = f"{report.bound:.6f}" if report.bound is not None else 'n/a'
            self.stdout.write(f"Measured contraction factor: {report.measured_factor:.6f} (bound {bound})")
        for name, path in report.outputs.items():
            self.stdout.write(f"  {name}: {path}")
        self.stdout.write(self.style.SUCCESS('Reconstruction finished'))
