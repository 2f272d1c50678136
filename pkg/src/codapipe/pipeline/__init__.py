"""Command-line pipeline: ingest, analyse, report and render."""
