//! File format notes appended to `--help`.

pub const EMBEDDINGS: &str = "\
EMBEDDING FILES (PROTOEMB1, little-endian):
  offset 0   9 bytes     magic \"PROTOEMB1\"
  offset 9   5 x u32     N, C, width, height, d_in
  offset 29  N records   u32 label, then width*height*d_in f32 values
  Value (x, y, d) sits at index (x*height + y)*d_in + d.";

pub const CHECKPOINT: &str = "\
CHECKPOINT FILES (PROTOFORM1, little-endian):
  offset 0   10 bytes    magic \"PROTOFORM1\"
  offset 10  10 x u32    formulation code, C, Q, D, width, height, d_in,
                         d_hidden, patch, mixture components
  offset 50  f64         L2 epsilon
  offset 58  u64         parameter count P
  offset 66  P x f64     neck (w1, b1, w2, b2), prototypes, head (weights, bias)";

pub const CONFIG: &str = "\
CONFIG FILES (--config):
  One `key = value` per line; `#` starts a comment line. Keys:
  formulation, learning_rate, weight_decay, batch_size, epochs, seed,
  lambda_clst, lambda_sep, per_class, dim, d_hidden, mixture_components,
  patch, eps, train_neck, train_prototypes, train_head, parallel.
  Precedence: built-in defaults < config file < command-line flags.";

pub const REPORT: &str = "\
OUTPUTS:
  report.csv     epoch,ce,clst,sep,total,test_acc (epoch 0 = untrained model)
  summary.json   config, final accuracy, wall time, parameter checksum
  model.ckpt     PROTOFORM1 checkpoint
  config.txt     the effective configuration in --config format";

pub const SWEEP: &str = "\
OUTPUTS:
  sweep.csv          formulation,axis_value,seed,test_acc (NaN = diverged run)
  sweep_summary.csv  formulation,axis_value,mean_test_acc,std_test_acc,runs";

pub const SPHERE: &str = "\
OUTPUTS:
  sphere.csv    lon,lat,value on the lattice (D = 3 prototypes)
  sphere.svg    heat map of the same grid
  profile.csv   cos,value along a great circle (any D)";

pub const THREADS: &str = "\
ENVIRONMENT:
  PROTOFORM_THREADS   cap on worker threads (default: all cores)

EXIT CODES:
  0 success, 1 usage error, 2 runtime or numerical failure";
