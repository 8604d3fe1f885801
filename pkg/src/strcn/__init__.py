"""Spatiotemporal recurrent convolutional networks for micro-expression recognition.

Pipeline stages, in order: spatial alignment (:mod:`strcn.spatial`), Eulerian
motion magnification (:mod:`strcn.magnify`), input encodings
(:mod:`strcn.connectivity`, :mod:`strcn.flow`), the recurrent convolutional
classifier (:mod:`strcn.model`) built on a small reverse-mode autodiff core
(:mod:`strcn.autodiff`), training (:mod:`strcn.training`) and cross-validation
(:mod:`strcn.evaluation`).
"""

__version__ = "0.1.0"
