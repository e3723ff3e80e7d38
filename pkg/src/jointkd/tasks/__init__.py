"""Task pipelines: topic classification, two-tower recommendation, retrieval fine-tuning."""
