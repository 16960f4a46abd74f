# Utils package for the disparity decomposition toolkit
__version__ = "0.3.0"
