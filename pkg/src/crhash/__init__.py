"""Collision-resistant unsupervised hashing at desk scale.

Submodules:
    codes       bit-packed binary codes, Hamming kernels, collision census
    features    tanh-normalized feature geometry and sign quantization
    losses      NHD / pseudo-label / dot-product / attention objectives
    attention   collision-sensitive attention pooling primitives
    clustering  affinity-propagation pseudo-labeling
    encoder     the CSA + linear-head toy encoder with exact backward
    optim       Adam
    training    the training loop, model state, and CRHM serialization
    codebook    per-bit two-centroid codebook variant with a DEC loss
    retrieval   exact Hamming ranking, mAP, distribution diagnostics
    synthdata   seeded hierarchical synthetic datasets (CRHF files)
    gradcheck   finite-difference verification of every gradient
    cli         the `crhash` command-line front door

The package is deliberately import-light at the top level so the CLI can
apply thread caps before numpy loads.
"""

__version__ = "0.1.0"
