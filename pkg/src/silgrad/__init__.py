"""silgrad: differentiable kinematics + silhouette rendering for visual tool-pose correction."""

__version__ = "0.1.0"
