"""Desk-scale benchmark for risk-budgeted content-perturbation attacks on news recommenders.

The package is organised around a small pipeline:

* :mod:`poisonbench.corpus` -- data model and MIND-style ingestion plus a
  seeded synthetic corpus generator,
* :mod:`poisonbench.embeddings` -- word vectors and all cosine distances,
* :mod:`poisonbench.recommender` -- tiny differentiable click models with
  analytic gradients/Hessians, training, ranking and MRR,
* :mod:`poisonbench.risk` -- exposure-risk accounting and effectiveness scores,
* :mod:`poisonbench.hiertree` -- effectiveness-sorted complete binary trees
  with logarithmic action sampling,
* :mod:`poisonbench.influence` -- influence-function reward estimation and the
  retraining oracle it is validated against,
* :mod:`poisonbench.agent` -- the MDP environment, learning agent and baselines,
* :mod:`poisonbench.harness` -- experiment configuration and CLI pipelines.
"""

__version__ = "0.1.0"
