"""
Test package for Stereo Calib
"""
