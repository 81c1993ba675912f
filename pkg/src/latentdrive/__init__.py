"""Joint sequential latent model and maximum-entropy driving policy.

Subpackages: ``worldsim`` (2D urban driving simulator), ``latentmodel``
(filtering latent model with mask decoding), ``policy`` (soft actor-critic on
latents), ``replay``, ``trainer``, ``metrics`` and ``cli``.
"""

__version__ = "0.1.0"
