"""Incoming null foliations of perturbed Schwarzschild exteriors."""
