from reconstruction.exceptions import VerificationError
from reconstruction.experiments import run_verify

from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = 'Run the invariant suite on the configured instance; exits 3 if any check fails'

    def run(self, config, options):
        try:
            checks = run_verify(config)
        except VerificationError as e:
            for row in e.rows:
                self.stdout.write(self.style.ERROR(f"FAIL {row['check']}: {row['detail']}"))
            e.rows = []
            raise
        for check in checks:
            self.stdout.write(f"ok   {check.check}: {check.detail}")
        self.stdout.write(self.style.SUCCESS(f"All {len(checks)} checks passed"))
