"""Contact-aware guided diffusion planning on small manipulation environments.

Modules: ``envs`` (toy environments), ``data`` (demonstrations and
normalisation), ``schedule`` and ``diffcore`` (noise schedule and MLP core),
``denoiser`` and ``dynmodel`` (learned models), ``guidance`` (energy terms),
``guidescript`` (guidance language and generation loop), ``planner``
(sampling and receding-horizon control), ``evalharness`` (experiments) and
``cli``.
"""
__version__ = "0.1.0"
