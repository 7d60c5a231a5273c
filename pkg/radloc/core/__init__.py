"""
Core numerics: geometry, radiance fields, rendering and field fitting.
"""
