"""
VG3S Occupancy Pipeline Package
"""
