"""Virtual LogLog sketches for per-flow cardinality estimation.

Flows share one pool of small registers; each flow reads a pseudo-random
subset of k of them. Estimators: the generalized-mean family vLL_theta
(vHLL at theta = -1) and a maximum-likelihood estimator vLL-MLE.
"""

__version__ = "0.1.0"
