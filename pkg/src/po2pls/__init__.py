"""Probabilistic two-way orthogonal partial least squares (PO2PLS)."""
