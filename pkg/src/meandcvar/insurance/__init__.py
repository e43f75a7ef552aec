"""Life and non-life line-of-business simulation and underwriting control."""
