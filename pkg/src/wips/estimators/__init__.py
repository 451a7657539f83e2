from .clt import (Centering, NearSingularError, PairKernelCache, TestFunction, fluctuation_field,
                  fluctuation_samples,
                  nystrom_covariance, pair_kernels, pair_mean, variance_targets)
from .lln import (BLDictionary, all_pairs, coupling_error, dbl_surrogate, lln_rate_table,
                  poc_cross_covariance)
from .ustat import (generating_check, girsanov_functionals, incomplete_u, mwi_product,
                    u_statistic)
