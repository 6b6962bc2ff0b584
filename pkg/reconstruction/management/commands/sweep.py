from reconstruction.experiments import run_sweep

from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Measure contraction factors and their bounds over the configured parameter grid'

    def run(self, config, options):
        result = run_sweep(config)
        for row in result.rows:
            bound = row['bound'] if row['bound'] != '' else 'n/a'
            self.stdout.write(
                f"{row['parameter_name']}={row['parameter_value']}: measured {row['measured']:.8f}, bound {bound}"
            )
        self.stdout.write(self.style.SUCCESS(f"{len(result.rows)} grid point(s) written to {result.path}"))
