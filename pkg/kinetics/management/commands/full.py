from ._base import PipelineCommand


class Command(PipelineCommand):
    help = "cell_problem, capacity_curve, simulate, pde and validate in one run"
    pipeline = "full"
