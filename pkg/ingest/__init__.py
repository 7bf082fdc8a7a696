"""Dataset ingestion and run configuration."""
