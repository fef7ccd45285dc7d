from ._base import PipelineCommand


class Command(PipelineCommand):
    help = "Solve the cell problem: beta_table.csv and f_curve.csv"
    pipeline = "cell_problem"
