"""Hierarchical multi-agent controller: regions, features, demand predictor, policy."""
