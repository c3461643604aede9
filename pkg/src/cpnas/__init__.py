"""Child-Parent search for binarized network architectures."""
