"""Desk-scale lab for spatiotemporal adversarial attacks on embodied QA agents.

Subpackages:
    scenegraph  -- procedural houses, questions, episodes, shortest paths
    diffrender  -- software rasterizer with exact texture gradients
    tensornet   -- minimal reverse-mode autodiff over dense tensors
    agent       -- embodied navigation + QA models and training
    attack      -- trajectory-attention-guided 3D texture perturbations
    evalharness -- metrics, transfer / generalization / defense experiments
    cli         -- batch command-line pipeline
"""

__version__ = "0.1.0"
