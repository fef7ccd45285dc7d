from ._base import PipelineCommand


class Command(PipelineCommand):
    help = "Solve the Smoluchowski system: macro_counts.csv, macro_functionals.csv, ledger.json"
    pipeline = "pde"
