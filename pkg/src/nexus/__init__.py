"""Actor-dyad conflict escalation forecasting pipeline.

Stages: ingest -> fit-trends -> label -> index -> digest -> forecast ->
evaluate, orchestrated by the ``nexus`` CLI with per-stage manifests and
fixed seeds for end-to-end reproducibility.
"""

__version__ = "0.1.0"
