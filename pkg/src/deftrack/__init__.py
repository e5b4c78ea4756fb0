"""Articulated deformable tracking from organised depth sequences.

Dual quaternion skinned templates are fitted frame by frame: a damped least
squares pose solve over projective point-plane associations, followed by
independent per-vertex warp refinement.
"""

__version__ = "0.1.0"
