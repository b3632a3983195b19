"""Multi-branch correlation-filter tracking with adaptive fusion."""
