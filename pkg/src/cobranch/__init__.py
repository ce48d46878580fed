"""Two-branch co-training for long-tailed generalized category discovery.

A contrastive-learning branch and a pseudo-labeling branch train over a
shared encoder and advise each other: cluster sizes in contrastive feature
space estimate the (unknown) long-tailed class distribution, which
regularizes and debiases the classifier; the classifier's rectified,
subsampled pseudo-labels weight a soft contrastive loss in return.
"""

__version__ = "0.1.0"
