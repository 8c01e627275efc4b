import numpy as np
import scipy
import pandas as pd
import torch
import tqdm

import SmartMerge

print(f"Numpy version: {np.__version__}")
print(f"Scipy version: {scipy.__version__}")
print(f"pandas version: {pd.__version__}")
print(f"Pytorch version: {torch.__version__}")
print(f"tqdm version: {tqdm.__version__}")
print(f"SmartMerge version: {SmartMerge.__version__}")
print(f"float64 default available: {torch.zeros(1, dtype=torch.float64).dtype}")
