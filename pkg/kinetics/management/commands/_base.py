"""
Shared plumbing for the lab's management commands.
"""
import logging

from django.core.exceptions import ValidationError
from django.core.management.base import BaseCommand, CommandError

from kinetics.config import parse_config
from kinetics.exceptions import CoagLabError
from kinetics.runner import run_experiment

logger = logging.getLogger("kinetics")


def _u64(value):
    seed = int(value)
    if not 0 <= seed < 2 ** 64:
        raise ValueError("seed must fit in 64 bits")
    return seed


class PipelineCommand(BaseCommand):
    """Runs one pipeline; subclasses only set ``pipeline`` and ``help``."""
    pipeline = None

    def add_arguments(self, parser):
        parser.add_argument("--config", required=True, help="experiment file (TOML or canonical JSON)")
        parser.add_argument("--workers", type=int, help="replicas dispatched at once")
        parser.add_argument("--out", help="output directory")
        parser.add_argument("--seed", type=_u64, help="base seed (unsigned 64-bit)")
        parser.add_argument("--echo-config", action="store_true", help="print the canonical config and exit")

    def load(self, options):
        try:
            cfg = parse_config(options["config"])
            overrides = {}
            if options.get("seed") is not None:
                overrides["params__seed"] = options["seed"]
            if options.get("workers") is not None:
                overrides["run__workers"] = options["workers"]
            if options.get("out"):
                overrides["run__out"] = options["out"]
            return cfg.replace(**overrides) if overrides else cfg
        except ValidationError as exc:
            details = "\n".join(f"  {key}: {'; '.join(messages)}" for key, messages in exc.message_dict.items())
            raise CommandError(f"invalid config {options['config']}:\n{details}")

    def handle(self, *args, **options):
        cfg = self.load(options)
        if options["echo_config"]:
            self.stdout.write(cfg.canonical(), ending="")
            return
        try:
            status = run_experiment(cfg, self.pipeline)
        except (CoagLabError, ValueError, OSError) as exc:
            raise CommandError(f"{self.pipeline} failed: {exc}")
        out = cfg["run"]["out"]
        if status:
            self.stdout.write(self.style.ERROR(f"{self.pipeline}: checks failed, see {out}/report.json"))
            raise CommandError("validation failed", returncode=status)
        self.stdout.write(self.style.SUCCESS(f"{self.pipeline} finished, artifacts in {out}"))
