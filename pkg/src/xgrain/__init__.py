"""Desk-scale multi-grained vision-language alignment.

Concepts — objects, regions, and whole images — share one contrastive
space with text; a fusion encoder grounds them for box regression,
matching, and masked-language-modeling objectives, all trained from
scratch on a procedurally generated corpus.
"""

__version__ = "0.1.0"
