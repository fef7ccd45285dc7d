import graphene
from graphene_django import DjangoObjectType
from graphene import relay
from django.core.exceptions import ValidationError
from graphene_django.filter import DjangoFilterConnectionField
from graphql import GraphQLError
from .config import PIPELINES, parse_config
from .core import check_hypothesis
from .filters import ExperimentRunFilter, CheckResultFilter
from .models import ExperimentRun, CheckResult

# ==============================
# GraphQL Types
# ==============================

class RunType(DjangoObjectType):
    class Meta:
        model = ExperimentRun
        interfaces = (relay.Node,)
        fields = "__all__"


class CheckType(DjangoObjectType):
    class Meta:
        model = CheckResult
        interfaces = (relay.Node,)
        fields = "__all__"


class HypothesisType(graphene.ObjectType):
    holds = graphene.Boolean()
    worst_triple = graphene.List(graphene.Int)
    worst_ratio = graphene.Float()
    constant_alpha_equivalent = graphene.Boolean()
    nonincreasing_d_equivalent = graphene.Boolean()


# ==============================
# Input Types
# ==============================

class LaunchRunInput(graphene.InputObjectType):
    config_path = graphene.String(required=True)
    pipeline = graphene.String()
    seed = graphene.Float()
    workers = graphene.Int()


# ==============================
# Mutations
# ==============================

def _messages(error):
    return "; ".join(f"{key}: {' '.join(msgs)}" for key, msgs in error.message_dict.items()) \
        if hasattr(error, "message_dict") else " ".join(error.messages)


class LaunchRun(graphene.Mutation):
    class Arguments:
        input = LaunchRunInput(required=True)

    run = graphene.Field(RunType)
    message = graphene.String()

    def mutate(self, info, input):
        from .tasks import execute_run

        pipeline = input.pipeline or None
        if pipeline and pipeline not in PIPELINES:
            raise GraphQLError(f"Unknown pipeline {pipeline}.")
        if input.workers is not None and input.workers < 1:
            raise GraphQLError("Workers must be at least 1.")
        overrides = {}
        if input.seed is not None:
            if input.seed < 0 or input.seed != int(input.seed):
                raise GraphQLError("Seed must be a nonnegative integer.")
            overrides["params__seed"] = int(input.seed)
        if input.workers is not None:
            overrides["run__workers"] = input.workers
        try:
            cfg = parse_config(input.config_path)
            if overrides:
                cfg = cfg.replace(**overrides)
        except ValidationError as e:
            raise GraphQLError(f"Invalid config: {_messages(e)}")
        run = ExperimentRun(
            pipeline=pipeline or cfg["run"]["pipeline"],
            seed=cfg["params"]["seed"],
            config_hash=cfg.config_hash,
            physics_hash=cfg.physics_hash,
            out_dir=cfg["run"]["out"],
            workers=cfg["run"]["workers"],
            replicas=cfg["simulate"]["replicas"],
        )
        run.save()
        execute_run.delay(run.id, input.config_path, pipeline, overrides)
        run.refresh_from_db()
        return LaunchRun(run=run, message="Run queued.")


# ==============================
# Main Mutation & Query classes
# ==============================

class Mutation(graphene.ObjectType):
    launch_run = LaunchRun.Field()


class Query(graphene.ObjectType):
    all_runs = DjangoFilterConnectionField(RunType, filterset_class=ExperimentRunFilter)
    all_checks = DjangoFilterConnectionField(CheckType, filterset_class=CheckResultFilter)
    hypothesis = graphene.Field(HypothesisType, config_path=graphene.String(required=True))

    def resolve_hypothesis(self, info, config_path):
        try:
            cfg = parse_config(config_path)
        except ValidationError as e:
            raise GraphQLError(f"Invalid config: {_messages(e)}")
        report = check_hypothesis(cfg.alpha(), cfg.diffusion(), cfg["params"]["m_max"], cfg["params"]["dim"])
        return HypothesisType(
            holds=report.holds,
            worst_triple=list(report.worst_triple),
            worst_ratio=report.worst_ratio,
            constant_alpha_equivalent=report.constant_alpha_equivalent,
            nonincreasing_d_equivalent=report.nonincreasing_d_equivalent,
        )
