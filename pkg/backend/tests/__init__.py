"""
Tests package for the lesion segmentation harness.
"""
