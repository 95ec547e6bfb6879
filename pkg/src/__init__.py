"""
LegoFormer desk-scale reconstruction - source package
"""
