"""Continuous-CRF fusion of multi-scale depth score maps.

Modules: ``grid`` (file formats, resampling, features), ``gaussfilter``
(dense and permutohedral-lattice Gaussian filtering), ``cmf`` (one
mean-field update and its backward pass), ``fusion`` (cascade and
multi-scale models, exact MAP oracle), ``frontend``/``synth``/``train``
(toy network, synthetic data, two-phase SGD), ``metrics`` and ``cli``.
"""

__version__ = "0.1.0"
