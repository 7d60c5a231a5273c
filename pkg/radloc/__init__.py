"""
radloc: particle-filter pose refinement against voxel radiance fields.
"""

__version__ = "0.1.0"
