"""Manifests, dataset building, correlation metrics and reports."""
