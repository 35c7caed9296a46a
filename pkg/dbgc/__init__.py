"""Dual-branch PolSAR land-cover classifier: a masked graph autoencoder over superpixels
fused with a patch CNN over pixels."""
