"""
LegoFormer desk-scale reconstruction - test suite
"""
