"""Digital-phenotyping pipeline: ingestion, features, contrastive models, evaluation."""

__version__ = "0.1.0"
