"""pollisim: geometric core of a precision-pollination stack, simulated.

Single-shot 6-DoF flower pose measurements (synthesized with calibrated
noise) are fused by SO(3)-aware Kalman filtering and nearest-neighbor data
association into a global flower state, which a commander state machine
consumes to search for, approach, and pollinate flowers with an idealized
eye-in-hand arm.
"""

__version__ = "0.1.0"
