"""Desk-scale knowledge-editing laboratory.

A trainable toy decoder-only transformer, a rank-one MLP editor with
multi-layer (redundant) injection, and an evaluation/analysis harness for
multi-hop recall and counterfactual language metrics.
"""

__version__ = "0.1.0"
