"""
Partially separable dynamic MRI reconstruction toolkit.

Library modules for phantom synthesis, Cartesian undersampling, annihilating
filters, the half-quadratic splitting solver, unrolled learning and metrics.
"""
