"""Domain-incremental prompt learning with knowledge-aligned prompt pools."""
