"""
Partial-to-full volumetric segmentation transfer pipeline
"""
