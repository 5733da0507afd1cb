"""meshanim: speech-driven 3D mesh animation on a numpy autodiff core.

Modules: ``tensor`` (reverse-mode autodiff), ``mesh`` (triangle meshes and
graph operators), ``resample`` (QEM decimation hierarchy), ``spectral``
(Chebyshev graph convolution), ``ot`` (varifolds and sliced Wasserstein),
``model``, ``train``, ``eval`` and ``cli``.
"""

__version__ = "0.1.0"
