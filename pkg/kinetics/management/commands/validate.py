from ._base import PipelineCommand


class Command(PipelineCommand):
    help = "Check the run artifacts against each other and write report.json"
    pipeline = "validate"
