"""On-disk formats: feature files, checkpoints and tables."""
