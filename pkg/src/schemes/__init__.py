# Import all scheme modules to make them available when importing the package
from . import offline
from . import baselines
from . import online
