from ._base import PipelineCommand


class Command(PipelineCommand):
    help = "Run the particle replicas: events.jsonl, counts.csv, functionals.csv, stats.json"
    pipeline = "simulate"
