"""Tests for mnar-factor."""
