"""Active tactile exploration and recognition of rigid 3D objects.

A contact simulator over convex-decomposed objects, a permutation-invariant
point-set encoder, a co-trained explorer/discriminator pair, heuristic and
registration baselines, and a reproducible experiment harness.
"""

__version__ = "0.1.0"
