"""Two-hand robotic piano playing with a diffusion residual policy.

The stack: MIDI ingestion -> goal key trajectories, a geometric keyboard
environment with articulated hands, damped-least-squares IK producing a
nominal action, a FiLM-conditioned 1-D U-Net denoiser sampled with DDIM
that refines it, a composite reward (task / audio / style / semantic
oracle), and a behavior-cloning trainer with rollout evaluation.
"""

__version__ = "0.1.0"
