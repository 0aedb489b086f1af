"""Networked deployment: store nodes and the stateless query engine."""
