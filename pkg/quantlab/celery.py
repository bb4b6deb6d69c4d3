import os

from celery import Celery

os.environ.setdefault("DJANGO_SETTINGS_MODULE", "quantlab.settings")


app = Celery("quantlab")
app.config_from_object("django.conf:settings", namespace="CELERY")

# research loops are long and CPU-bound; one at a time per worker process
app.conf.update(
    worker_prefetch_multiplier=1,
    task_acks_late=True,
    task_routes={"research.tasks.*": {"queue": "research"}},
)

app.autodiscover_tasks()
