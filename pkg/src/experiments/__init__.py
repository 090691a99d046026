from . import harness
