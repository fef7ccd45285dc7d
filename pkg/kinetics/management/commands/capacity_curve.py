from ._base import PipelineCommand


class Command(PipelineCommand):
    help = "F(beta) over a logarithmic grid against the capacity of the support"
    pipeline = "capacity_curve"
