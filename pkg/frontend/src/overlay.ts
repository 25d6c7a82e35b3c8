/**
 * overlay.ts - False-color compositing of the two tile streams.
 *
 * Reference luminance is tinted green and moving luminance purple
 * (red+blue), then the two are added per pixel: aligned structure reads
 * as neutral grey, misaligned structure fringes green on one side and
 * purple on the other. This is the only pixel math in the client; the
 * warp itself always happens server-side.
 */

/** Luminance of one RGBA pixel; tiles are greyscale so channels agree. */
function lum(rgba: Uint8ClampedArray, i: number): number {
  return Math.round((rgba[i] + rgba[i + 1] + rgba[i + 2]) / 3);
}

/**
 * Blend two equally-sized RGBA buffers (as produced by canvas
 * `getImageData`) into a green/purple additive overlay.
 */
export function additiveOverlay(
  ref: Uint8ClampedArray,
  mov: Uint8ClampedArray,
  out?: Uint8ClampedArray,
): Uint8ClampedArray {
  if (ref.length !== mov.length || ref.length % 4 !== 0) {
    throw new Error(`mismatched RGBA buffers: ${ref.length} vs ${mov.length}`);
  }
  const blended = out ?? new Uint8ClampedArray(ref.length);
  for (let i = 0; i < ref.length; i += 4) {
    const g = lum(ref, i);
    const p = lum(mov, i);
    // green (0,g,0) + purple (p,0,p); Uint8ClampedArray clamps at 255
    blended[i] = p;
    blended[i + 1] = g;
    blended[i + 2] = p;
    blended[i + 3] = 255;
  }
  return blended;
}
