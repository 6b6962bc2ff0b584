"""
Shared plumbing for the experiment subcommands: config loading, the common
flags and the mapping from toolkit errors to process exit codes.
"""
import json
from pathlib import Path

from django.core.management.base import BaseCommand, CommandError
from rest_framework.exceptions import ValidationError

from reconstruction.exceptions import ConfigError, ReconstructionError
from reconstruction.experiments import ExperimentConfig
from reconstruction.serializers import load_config

EXIT_CONFIG = ConfigError.exit_code
EXIT_IO = 4


class ExperimentCommand(BaseCommand):

    def add_arguments(self, parser):
        parser.add_argument('--config', help='JSON experiment config; defaults apply when omitted')
        parser.add_argument('--out', help='Output directory (overrides the config and PNP_OUTPUT_DIR)')
        parser.add_argument('--seed', type=int, help='Seed for masks, noise and power-iteration starts')
        parser.add_argument('--threads', type=int, help='Worker threads for sweeps')

    def load_config(self, options) -> ExperimentConfig:
        data = {}
        if options.get('config'):
            path = Path(options['config'])
            try:
                data = json.loads(path.read_text())
            except OSError as e:
                raise CommandError(f"Cannot read config {path}: {e}", returncode=EXIT_IO)
            except json.JSONDecodeError as e:
                raise CommandError(f"Config {path} is not valid JSON: {e}", returncode=EXIT_CONFIG)
        seed = options.get('seed')
        if seed is not None and seed < 0:
            raise CommandError(f"--seed must be nonnegative, got {seed}", returncode=EXIT_CONFIG)
        threads = options.get('threads')
        if threads is not None and threads < 1:
            raise CommandError(f"--threads must be at least 1, got {threads}", returncode=EXIT_CONFIG)
        config = load_config(data)
        return config.with_overrides(output_dir=options.get('out'), seed=seed, threads=threads)

    def handle(self, *args, **options):
        try:
            config = self.load_config(options)
            self.run(config, options)
        except CommandError:
            raise
        except ValidationError as e:
            raise CommandError(f"Invalid config: {json.dumps(e.detail, default=str)}", returncode=EXIT_CONFIG)
        except ReconstructionError as e:
            rows = getattr(e, 'rows', None)
            for row in rows or []:
                self.stderr.write(f"  {row}")
            raise CommandError(str(e), returncode=e.exit_code)
        except OSError as e:
            raise CommandError(str(e), returncode=EXIT_IO)

    def run(self, config: ExperimentConfig, options):
        raise NotImplementedError
