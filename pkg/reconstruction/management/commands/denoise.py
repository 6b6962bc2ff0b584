from reconstruction.experiments import run_denoise

from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Apply the kernel denoiser built from a noisy image to that image'

    def run(self, config, options):
        report = run_denoise(config)
        self.stdout.write(
            f"{report.mode} denoiser: PSNR {report.noisy_psnr:.2f} dB -> {report.denoised_psnr:.2f} dB"
        )
        for name, path in report.outputs.items():
            self.stdout.write(f"  {name}: {path}")
        self.stdout.write(self.style.SUCCESS('Denoising finished'))
