"""Desk-scale BEV 3D detection with simulated multi-modal distillation.

A fusion teacher (LiDAR pillars + lifted camera features) and a camera-only
student with a simulated-LiDAR branch train on synthetic multi-view scenes;
four distillation losses transfer teacher knowledge in the shared BEV space.
Everything runs on a small float64 autodiff core with numba-accelerated
scatter/sampling kernels (BEVSIM_BACKEND selects numba or pure numpy).
"""

__version__ = "0.1.0"
