"""Multi-spectral object re-identification with identity-conditional prompt learning."""
