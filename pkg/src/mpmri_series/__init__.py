"""Series-type classification for multi-parametric MRI studies.

Modules: ``ingest`` (DICOM trees to labelled volumes), ``preprocess``, ``models``,
``training``, ``inference`` (fold ensembles and hanging order), ``evaluation``,
``phantom`` (synthetic studies) and ``cli``.
"""

__version__ = "0.1.0"
