"""
Celery tasks for the kinetics app
"""
import logging

from celery import shared_task

logger = logging.getLogger(__name__)


@shared_task
def simulate_replica(payload, replica):
    """
    Run one replica of a particle ensemble.
    ``payload`` carries the canonical config JSON and the particle count;
    returns the JSON-ready replica record.
    """
    from .config import parse_text
    from .runner import simulate_one

    cfg = parse_text(payload["config"], fmt="json")
    record = simulate_one(cfg, payload["n_particles"], replica)
    logger.debug("replica %d: %d collisions", replica, record["summary"]["collision_count"])
    return record


@shared_task
def execute_run(run_id, config_path, pipeline=None, overrides=None):
    """
    Execute a pipeline for a run queued through the GraphQL API.
    The run record moves from pending to running and ends as passed,
    failed or error.
    """
    from django.core.exceptions import ValidationError

    from .config import parse_config
    from .exceptions import CoagLabError
    from .models import ExperimentRun
    from .runner import run_experiment

    record = ExperimentRun.objects.get(pk=run_id)
    try:
        cfg = parse_config(config_path)
        if overrides:
            cfg = cfg.replace(**overrides)
        status = run_experiment(cfg, pipeline or cfg["run"]["pipeline"], record=record)
    except (ValidationError, CoagLabError, ValueError, OSError) as exc:
        logger.error("run %s failed: %s", run_id, exc)
        record.refresh_from_db()
        if record.status != ExperimentRun.Status.ERROR:
            record.status = ExperimentRun.Status.ERROR
            record.message = str(exc)[:2000]
            record.save(update_fields=["status", "message"])
        return ExperimentRun.Status.ERROR
    return ExperimentRun.Status.PASSED if status == 0 else ExperimentRun.Status.FAILED
