"""Synthetic scenes, detection noise and MOTChallenge-format IO."""
