import { describe, expect, it } from 'vitest'

import { orbitPose } from '../src/camera.js'
import type { GaussianInfo } from '../src/protocol.js'
import {
  projectGlyphs,
  selectByClick,
  selectInRect,
} from '../src/selection.js'

const pose = orbitPose({
  target: [0, 0, 0], distance: 3, azimuth: 0, elevation: 0,
})

function glyph(index: number, mean: [number, number, number]): GaussianInfo {
  return { index, mean, radius: 0.1, confidence: 1 }
}

describe('glyph projection', () => {
  it('keeps only glyphs inside the viewport', () => {
    const glyphs = [
      glyph(0, [0, 0, 0]),
      glyph(1, [50, 0, 0]),     // far off screen
      glyph(2, [0, 0, 10]),     // behind the camera
    ]
    const projected = projectGlyphs(glyphs, pose, 100, 64, 64)
    expect(projected.map((g) => g.index)).toEqual([0])
  })
})

describe('rect selection', () => {
  const glyphs = projectGlyphs([
    glyph(0, [0, 0, 0]),
    glyph(3, [0.3, 0, 0]),
    glyph(7, [-0.3, 0.2, 0]),
  ], pose, 100, 64, 64)

  it('selects everything under a full-viewport rect', () => {
    expect(selectInRect(glyphs, { x0: 0, y0: 0, x1: 64, y1: 64 }))
      .toEqual([0, 3, 7])
  })

  it('respects the rectangle regardless of drag direction', () => {
    const a = selectInRect(glyphs, { x0: 64, y0: 64, x1: 30, y1: 30 })
    const b = selectInRect(glyphs, { x0: 30, y0: 30, x1: 64, y1: 64 })
    expect(a).toEqual(b)
  })

  it('returns an empty selection for an empty region', () => {
    expect(selectInRect(glyphs, { x0: 0, y0: 0, x1: 2, y1: 2 })).toEqual([])
  })
})

describe('click selection', () => {
  const glyphs = projectGlyphs([
    glyph(0, [0, 0, 0]),
    glyph(1, [0.05, 0, 0]),
  ], pose, 100, 64, 64)

  it('picks the nearest glyph within the pick radius', () => {
    const center = glyphs.find((g) => g.index === 0)!
    expect(selectByClick(glyphs, center.x - 0.4, center.y)).toEqual([0])
  })

  it('clicking empty background selects nothing', () => {
    expect(selectByClick(glyphs, 2, 2)).toEqual([])
  })
})
