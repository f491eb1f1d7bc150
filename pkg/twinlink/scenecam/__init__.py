"""
Analytic stand-in scene, pinhole camera, ray-cast RGB / segmentation /
depth rendering, and image / point cloud files.
"""
