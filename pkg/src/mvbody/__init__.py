"""mvbody: cesarean-risk prediction from multi-view body projections and medical records.

Pipeline stages: synthetic body generation (synth), mesh projection (meshproj),
medical-record handling (records), the two-branch network (net), metric-learning
loss (loss), training/cross-validation (train), evaluation metrics (metrics),
and integrated-gradients explanations (explain). The cli module ties them into
one command-line tool.
"""

__version__ = "0.1.0"
