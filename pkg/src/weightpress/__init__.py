"""Weight compression for fully connected networks.

Three stages compose: magnitude pruning with masked retraining, k-means
weight sharing with centroid fine-tuning, and canonical Huffman coding of
the resulting index streams.  A bit-exact container format ties the stages
together and the kernels execute it without decompressing to dense form.
"""

__version__ = "0.1.0"
