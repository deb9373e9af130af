/** Dense row-major float kernels for the transformer forward pass. */

/** C[m,n] = A[m,k] @ B[k,n]; f64 accumulation for stable, deterministic sums. */
export function matmul(a: Float32Array, m: number, k: number,
                       b: Float32Array, n: number): Float32Array {
  const out = new Float32Array(m * n);
  for (let i = 0; i < m; i++) {
    const arow = i * k;
    const orow = i * n;
    for (let p = 0; p < k; p++) {
      const av = a[arow + p];
      if (av === 0) continue;
      const brow = p * n;
      for (let j = 0; j < n; j++) {
        out[orow + j] += av * b[brow + j];
      }
    }
  }
  return out;
}

export function addBias(x: Float32Array, rows: number, dim: number,
                        bias: Float32Array): Float32Array {
  const out = new Float32Array(rows * dim);
  for (let i = 0; i < rows; i++) {
    const off = i * dim;
    for (let j = 0; j < dim; j++) out[off + j] = x[off + j] + bias[j];
  }
  return out;
}

export function addInPlace(x: Float32Array, y: Float32Array): void {
  for (let i = 0; i < x.length; i++) x[i] += y[i];
}

export function layerNorm(x: Float32Array, rows: number, dim: number,
                          gain: Float32Array, bias: Float32Array,
                          eps = 1e-6): Float32Array {
  const out = new Float32Array(rows * dim);
  for (let i = 0; i < rows; i++) {
    const off = i * dim;
    let mean = 0;
    for (let j = 0; j < dim; j++) mean += x[off + j];
    mean /= dim;
    let varsum = 0;
    for (let j = 0; j < dim; j++) {
      const c = x[off + j] - mean;
      varsum += c * c;
    }
    const inv = 1.0 / Math.sqrt(varsum / dim + eps);
    for (let j = 0; j < dim; j++) {
      out[off + j] = (x[off + j] - mean) * inv * gain[j] + bias[j];
    }
  }
  return out;
}

/** softmax over the last axis of a rows x dim matrix, in place */
export function softmaxRows(x: Float32Array, rows: number, dim: number): void {
  for (let i = 0; i < rows; i++) {
    const off = i * dim;
    let max = -Infinity;
    for (let j = 0; j < dim; j++) if (x[off + j] > max) max = x[off + j];
    let sum = 0;
    for (let j = 0; j < dim; j++) {
      const e = Math.exp(x[off + j] - max);
      x[off + j] = e;
      sum += e;
    }
    for (let j = 0; j < dim; j++) x[off + j] /= sum;
  }
}

const GELU_C = Math.sqrt(2 / Math.PI);

/** tanh-approximation GELU, applied in place */
export function gelu(x: Float32Array): void {
  for (let i = 0; i < x.length; i++) {
    const v = x[i];
    x[i] = 0.5 * v * (1 + Math.tanh(GELU_C * (v + 0.044715 * v * v * v)));
  }
}
