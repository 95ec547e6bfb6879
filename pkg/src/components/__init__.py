"""
Building blocks of the LegoFormer network
"""
