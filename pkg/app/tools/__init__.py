"""Geometry, pose-graph and I/O building blocks"""
