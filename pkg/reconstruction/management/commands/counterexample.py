from reconstruction.experiments import run_counterexample

from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Tabulate the non-contractive plain-ISTA counterexample for n = 3 .. n_max'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--n-max', type=int, dest='n_max', help='Largest n (at least 3)')

    def run(self, config, options):
        n_max = options['n_max'] if options.get('n_max') is not None else config.n_max
        rows = run_counterexample(n_max, out_dir=config.out_dir)
        worst = min(row['dense_norm'] for row in rows)
        self.stdout.write(f"n = 3..{n_max}: every norm exceeds 1 (smallest {worst:.10f})")
        self.stdout.write(self.style.SUCCESS(f"{len(rows)} row(s) written to {config.out_dir / 'counterexample.csv'}"))
