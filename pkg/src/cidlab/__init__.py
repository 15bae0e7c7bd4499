"""Desk-scale laboratory for one-step diffusion distillation.

Trains a toy diffusion teacher, distills it into a one-step restoration
generator through the full loss ladder (VSD, SiD, CiD, CiDA), and verifies
every formula against analytic oracles, Monte-Carlo identity checks, and
finite-difference gradient tests.

Latents are plain ``torch.Tensor``s: ``[batch, channels, height, width]``
on the image track, ``[batch, dim]`` on the 2D track. The channel count
(dim 1) is a first-class property everywhere a codec is involved.
"""

__version__ = "0.1.0"
