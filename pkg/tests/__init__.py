"""Tests for outlierflow."""
