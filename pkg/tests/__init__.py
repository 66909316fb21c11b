# This file allows this folder to be treated as a Python package