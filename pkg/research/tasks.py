from celery import shared_task
from django.core.management import call_command


@shared_task
def run_research_loop(config_path=None, seed=None, max_loops=None, output_dir=None, resume=False):
    """
    Runs one research loop in a worker.
    Arguments mirror the run_loop command flags.
    """
    options = {'resume': resume}
    if config_path:
        options['config'] = config_path
    if seed is not None:
        options['seed'] = seed
    if max_loops is not None:
        options['max_loops'] = max_loops
    if output_dir:
        options['output_dir'] = output_dir
    call_command('run_loop', **options)
    return output_dir


@shared_task
def run_scheduler_ablation(config_path=None, seeds=10, max_loops=None, output_dir=None):
    """Bandit vs random scheduler over several seeds"""
    options = {'seeds': seeds}
    if config_path:
        options['config'] = config_path
    if max_loops is not None:
        options['max_loops'] = max_loops
    if output_dir:
        options['output_dir'] = output_dir
    call_command('compare_schedulers', **options)
    return output_dir
