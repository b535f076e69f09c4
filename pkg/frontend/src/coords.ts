// Canvas <-> field coordinate mapping.  The field lives on [-1, 1]^2 with
// x rightward and y downward (matching the decode's row order), so canvas
// pixel centers map affinely and the round trip is exact at pixel centers.

export interface CanvasSize {
  width: number;
  height: number;
}

export function canvasToField(px: number, py: number, size: CanvasSize): [number, number] {
  return [(2 * px + 1) / size.width - 1, (2 * py + 1) / size.height - 1];
}

export function fieldToCanvas(x: number, y: number, size: CanvasSize): [number, number] {
  return [((x + 1) * size.width - 1) / 2, ((y + 1) * size.height - 1) / 2];
}

/** Pixel displacement to field displacement (for drags). */
export function deltaToField(dxPx: number, dyPx: number, size: CanvasSize): [number, number] {
  return [(2 * dxPx) / size.width, (2 * dyPx) / size.height];
}

/** A vertical divider at continuous canvas x becomes a keep-right half-plane.
 * Unlike markers, the divider is an edge position, not a pixel center, so
 * the canvas midpoint maps to exactly zero. */
export function dividerToRegion(pxX: number, size: CanvasSize): {
  normal: [number, number];
  offset: number;
} {
  return { normal: [1, 0], offset: (2 * pxX) / size.width - 1 };
}

export function degreesToRadians(deg: number): number {
  return (deg * Math.PI) / 180;
}
