# Pydantic models: bundles, fit settings, state metadata, reports
