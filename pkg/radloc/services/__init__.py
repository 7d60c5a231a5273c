"""
Pose refinement services built on the core numerics.
"""
